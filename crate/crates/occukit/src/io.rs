//! File formats: MOCG occupancy grids, MOPC point clouds, MOSM semantic
//! masks, the JSON pose/camera/box records, a CSV point-cloud loader for
//! fixtures, and a PGM dump for quick top-down inspection.
//!
//! All binary formats are little-endian. Writers go through
//! [`write_atomic`] (write temp file, rename).

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, LabeledPointCloud, RigidPose};
use crate::grid::{GridSpec, VoxelGrid};
use crate::pseudolabel::{Box3D, SemanticMask};

pub const MOCG_MAGIC: &[u8; 4] = b"MOCG";
pub const MOPC_MAGIC: &[u8; 4] = b"MOPC";
pub const MOSM_MAGIC: &[u8; 4] = b"MOSM";

/// Canonical MOPC field names, in on-disk column order.
pub const MOPC_FIELDS: [&str; 11] = [
    "x", "y", "z", "vx", "vy", "amp", "snr", "t", "class", "conf", "track",
];

/// Write `bytes` to a temp file beside `path`, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Sequential little-endian reader with format-aware errors.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], format: &'static str, path: &Path) -> Self {
        Reader {
            buf,
            pos: 0,
            format,
            path: path.display().to_string(),
        }
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::BadHeader {
            format: self.format,
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != expected {
            return Err(self.err(format!("wrong magic bytes {:?}", got)));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    /// Fixed-width ASCII name, space padded.
    fn name(&mut self, width: usize) -> Result<String> {
        let raw = self.bytes(width)?;
        let s = std::str::from_utf8(raw).map_err(|_| self.err("non-ASCII name field"))?;
        Ok(s.trim_end_matches(' ').to_string())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn padded_name(name: &str, width: usize) -> Result<Vec<u8>> {
    if !name.is_ascii() || name.len() > width {
        return Err(Error::invalid(
            "name field",
            format!("{name:?} must be ASCII and at most {width} bytes"),
        ));
    }
    let mut out = name.as_bytes().to_vec();
    out.resize(width, b' ');
    Ok(out)
}

// ---------------------------------------------------------------------------
// MOCG occupancy grids
// ---------------------------------------------------------------------------

pub fn encode_mocg(grid: &VoxelGrid) -> Vec<u8> {
    let spec = &grid.spec;
    let (nx, ny, nz) = spec.dims();
    let mut out = Vec::with_capacity(76 + grid.labels().len());
    out.extend_from_slice(MOCG_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    for v in [
        spec.x_range.0,
        spec.x_range.1,
        spec.y_range.0,
        spec.y_range.1,
        spec.z_range.0,
        spec.z_range.1,
        spec.voxel_size,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in [nx, ny, nz] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&grid.class_count().to_le_bytes());
    out.extend_from_slice(grid.labels());
    out
}

pub fn write_mocg(grid: &VoxelGrid, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mocg(grid))
}

pub fn read_mocg(path: &Path) -> Result<VoxelGrid> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, "MOCG", path);
    r.magic(MOCG_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let ranges: Vec<f64> = (0..6).map(|_| r.f64()).collect::<Result<_>>()?;
    let voxel_size = r.f64()?;
    let dims: Vec<u32> = (0..3).map(|_| r.u32()).collect::<Result<_>>()?;
    let class_count = r.u32()?;
    let spec = GridSpec::new(
        (ranges[0], ranges[1]),
        (ranges[2], ranges[3]),
        (ranges[4], ranges[5]),
        voxel_size,
    )?;
    let (nx, ny, nz) = spec.dims();
    if (nx as u32, ny as u32, nz as u32) != (dims[0], dims[1], dims[2]) {
        return Err(r.err(format!(
            "stored dims {:?} disagree with ranges (expected {:?})",
            dims,
            (nx, ny, nz)
        )));
    }
    let labels = r.bytes(spec.num_voxels())?.to_vec();
    r.done()?;
    VoxelGrid::from_labels(spec, class_count, labels)
}

// ---------------------------------------------------------------------------
// MOPC point clouds
// ---------------------------------------------------------------------------

/// Columns present in a cloud, in canonical order. x/y/z are always first.
fn mopc_fields(cloud: &LabeledPointCloud) -> Vec<&'static str> {
    let mut fields = vec!["x", "y", "z"];
    if cloud.velocities().is_some() {
        fields.extend(["vx", "vy"]);
    }
    if cloud.amplitudes().is_some() {
        fields.push("amp");
    }
    if cloud.snrs().is_some() {
        fields.push("snr");
    }
    if cloud.timestamps().is_some() {
        fields.push("t");
    }
    if cloud.classes().is_some() {
        fields.push("class");
    }
    if cloud.confidences().is_some() {
        fields.push("conf");
    }
    if cloud.track_ids().is_some() {
        fields.push("track");
    }
    fields
}

fn mopc_value(cloud: &LabeledPointCloud, field: &str, i: usize) -> f32 {
    match field {
        "x" => cloud.positions()[i][0] as f32,
        "y" => cloud.positions()[i][1] as f32,
        "z" => cloud.positions()[i][2] as f32,
        "vx" => cloud.velocities().unwrap()[i][0] as f32,
        "vy" => cloud.velocities().unwrap()[i][1] as f32,
        "amp" => cloud.amplitudes().unwrap()[i] as f32,
        "snr" => cloud.snrs().unwrap()[i] as f32,
        "t" => cloud.timestamps().unwrap()[i] as f32,
        "class" => cloud.classes().unwrap()[i] as f32,
        "conf" => cloud.confidences().unwrap()[i] as f32,
        "track" => cloud.track_ids().unwrap()[i] as f32,
        _ => unreachable!("unknown canonical field"),
    }
}

pub fn encode_mopc(cloud: &LabeledPointCloud) -> Result<Vec<u8>> {
    let fields = mopc_fields(cloud);
    let n = cloud.len();
    let mut out = Vec::with_capacity(16 + fields.len() * 16 + n * fields.len() * 4);
    out.extend_from_slice(MOPC_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in &fields {
        out.extend_from_slice(&padded_name(f, 16)?);
    }
    for i in 0..n {
        for f in &fields {
            out.extend_from_slice(&mopc_value(cloud, f, i).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_mopc(cloud: &LabeledPointCloud, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mopc(cloud)?)
}

/// Assemble a cloud from named float columns (shared by MOPC and CSV).
fn cloud_from_columns(columns: &[(String, Vec<f64>)], n: usize) -> Result<LabeledPointCloud> {
    let col = |name: &str| -> Option<&Vec<f64>> {
        columns.iter().find(|(f, _)| f == name).map(|(_, v)| v)
    };
    let (xs, ys, zs) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(Error::invalid(
                "point cloud fields",
                "x, y and z columns are required",
            ))
        }
    };
    let positions: Vec<[f64; 3]> = (0..n).map(|i| [xs[i], ys[i], zs[i]]).collect();
    let mut cloud = LabeledPointCloud::from_positions(positions);
    cloud.validate()?;
    if let (Some(vx), Some(vy), Some(amp), Some(snr), Some(t)) =
        (col("vx"), col("vy"), col("amp"), col("snr"), col("t"))
    {
        let vel: Vec<[f64; 2]> = (0..n).map(|i| [vx[i], vy[i]]).collect();
        cloud.set_radar_channels(vel, amp.clone(), snr.clone(), t.clone())?;
    }
    if let Some(classes) = col("class") {
        let conf = col("conf").cloned().unwrap_or_else(|| vec![1.0; n]);
        let classes: Vec<u8> = classes
            .iter()
            .map(|&v| {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    Err(Error::invalid("class column", format!("bad class id {v}")))
                } else {
                    Ok(v as u8)
                }
            })
            .collect::<Result<_>>()?;
        cloud.set_semantics(classes, conf)?;
    }
    if let Some(tracks) = col("track") {
        let tracks: Vec<u32> = tracks
            .iter()
            .map(|&v| {
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    Err(Error::invalid("track column", format!("bad track id {v}")))
                } else {
                    Ok(v as u32)
                }
            })
            .collect::<Result<_>>()?;
        cloud.set_track_ids(tracks)?;
    }
    Ok(cloud)
}

pub fn read_mopc(path: &Path) -> Result<LabeledPointCloud> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, "MOPC", path);
    r.magic(MOPC_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let n_fields = r.u32()? as usize;
    let mut names = Vec::with_capacity(n_fields);
    for _ in 0..n_fields {
        names.push(r.name(16)?);
    }
    let mut columns: Vec<(String, Vec<f64>)> = names
        .iter()
        .map(|f| (f.clone(), Vec::with_capacity(n)))
        .collect();
    for _ in 0..n {
        for column in columns.iter_mut() {
            column.1.push(r.f32()? as f64);
        }
    }
    r.done()?;
    // Unknown field names are carried on disk but ignored here.
    columns.retain(|(f, _)| MOPC_FIELDS.contains(&f.as_str()));
    cloud_from_columns(&columns, n)
}

/// CSV point-cloud loader for test fixtures. First row is a header of
/// canonical field names.
pub fn read_point_cloud_csv(path: &Path) -> Result<LabeledPointCloud> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::invalid("csv", format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::invalid("csv", e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut columns: Vec<(String, Vec<f64>)> =
        headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid("csv", e.to_string()))?;
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::invalid("csv", format!("bad number {field:?}")))?;
            columns[i].1.push(v);
        }
        n += 1;
    }
    columns.retain(|(f, _)| MOPC_FIELDS.contains(&f.as_str()));
    cloud_from_columns(&columns, n)
}

// ---------------------------------------------------------------------------
// MOSM semantic masks
// ---------------------------------------------------------------------------

pub fn encode_mosm(mask: &SemanticMask) -> Result<Vec<u8>> {
    let n = (mask.width as usize) * (mask.height as usize);
    let mut out = Vec::with_capacity(32 + n * 5);
    out.extend_from_slice(MOSM_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&padded_name(&mask.camera, 16)?);
    out.extend_from_slice(&mask.width.to_le_bytes());
    out.extend_from_slice(&mask.height.to_le_bytes());
    for i in 0..n {
        out.push(mask.classes[i]);
        out.extend_from_slice(&mask.confidences[i].to_le_bytes());
    }
    Ok(out)
}

pub fn write_mosm(mask: &SemanticMask, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mosm(mask)?)
}

pub fn read_mosm(path: &Path) -> Result<SemanticMask> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, "MOSM", path);
    r.magic(MOSM_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let camera = r.name(16)?;
    let width = r.u32()?;
    let height = r.u32()?;
    let n = (width as usize) * (height as usize);
    let mut classes = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    for _ in 0..n {
        classes.push(r.u8()?);
        confidences.push(r.f32()?);
    }
    r.done()?;
    SemanticMask::new(camera, width, height, classes, confidences)
}

// ---------------------------------------------------------------------------
// JSON records: poses, cameras, boxes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub frame_id: u64,
    /// Row-major 4x4 homogeneous matrix.
    pub matrix: Vec<f64>,
}

impl PoseRecord {
    pub fn from_pose(frame_id: u64, pose: &RigidPose) -> Self {
        let m = pose.matrix();
        let matrix = (0..4)
            .flat_map(|r| (0..4).map(move |c| m[(r, c)]))
            .collect();
        PoseRecord { frame_id, matrix }
    }

    pub fn to_pose(&self) -> Result<RigidPose> {
        if self.matrix.len() != 16 {
            return Err(Error::invalid(
                "pose record",
                format!("matrix has {} entries, wanted 16", self.matrix.len()),
            ));
        }
        let m = Matrix4::from_fn(|r, c| self.matrix[r * 4 + c]);
        RigidPose::from_matrix(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub name: String,
    pub width: u32,
    pub height: u32,
    /// Row-major 3x3 pinhole intrinsics; skew must be zero.
    pub intrinsics: Vec<f64>,
    /// Row-major 4x4 transform mapping ego coordinates to camera coordinates.
    pub extrinsics: Vec<f64>,
}

impl CameraRecord {
    pub fn from_camera(cam: &CameraModel) -> Self {
        let e = cam.extrinsics.matrix();
        CameraRecord {
            name: cam.name.clone(),
            width: cam.width,
            height: cam.height,
            intrinsics: vec![cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0],
            extrinsics: (0..4)
                .flat_map(|r| (0..4).map(move |c| e[(r, c)]))
                .collect(),
        }
    }

    pub fn to_camera(&self) -> Result<CameraModel> {
        if self.intrinsics.len() != 9 {
            return Err(Error::invalid(
                "camera record",
                "intrinsics must have 9 entries",
            ));
        }
        if self.extrinsics.len() != 16 {
            return Err(Error::invalid(
                "camera record",
                "extrinsics must have 16 entries",
            ));
        }
        let k = &self.intrinsics;
        let pinhole = k[1] == 0.0 && k[3] == 0.0 && k[6] == 0.0 && k[7] == 0.0 && k[8] == 1.0;
        if !pinhole {
            return Err(Error::invalid(
                "camera record",
                "intrinsics must be zero-skew pinhole with unit last row",
            ));
        }
        let m = Matrix4::from_fn(|r, c| self.extrinsics[r * 4 + c]);
        CameraModel::new(
            self.name.clone(),
            k[0],
            k[4],
            k[2],
            k[5],
            self.width,
            self.height,
            RigidPose::from_matrix(m)?,
        )
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    write_atomic(path, &bytes)
}

pub fn read_poses_json(path: &Path) -> Result<Vec<(u64, RigidPose)>> {
    let records: Vec<PoseRecord> = read_json(path)?;
    records
        .iter()
        .map(|r| Ok((r.frame_id, r.to_pose()?)))
        .collect()
}

pub fn write_poses_json(poses: &[(u64, RigidPose)], path: &Path) -> Result<()> {
    let records: Vec<PoseRecord> = poses
        .iter()
        .map(|(id, p)| PoseRecord::from_pose(*id, p))
        .collect();
    write_json(&records, path)
}

pub fn read_cameras_json(path: &Path) -> Result<Vec<CameraModel>> {
    let records: Vec<CameraRecord> = read_json(path)?;
    records.iter().map(|r| r.to_camera()).collect()
}

pub fn write_cameras_json(cams: &[CameraModel], path: &Path) -> Result<()> {
    let records: Vec<CameraRecord> = cams.iter().map(CameraRecord::from_camera).collect();
    write_json(&records, path)
}

pub fn read_boxes_json(path: &Path) -> Result<Vec<Box3D>> {
    let boxes: Vec<Box3D> = read_json(path)?;
    for b in &boxes {
        b.validate()?;
    }
    Ok(boxes)
}

pub fn write_boxes_json(boxes: &[Box3D], path: &Path) -> Result<()> {
    write_json(&boxes.to_vec(), path)
}

// ---------------------------------------------------------------------------
// PGM rendering
// ---------------------------------------------------------------------------

/// Binary PGM of the grid seen from above: one pixel per (x, y) column,
/// shaded by the topmost occupied class. Row 0 is the max-Y edge.
pub fn write_bev_pgm(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let (nx, ny, nz) = grid.spec.dims();
    let scale = 255.0 / (grid.class_count().max(2) - 1) as f64;
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for row in 0..ny {
        let iy = ny - 1 - row;
        for ix in 0..nx {
            let mut shade = 0u8;
            for iz in (0..nz).rev() {
                let label = grid.label(ix, iy, iz);
                if label != 0 {
                    shade = ((label as f64) * scale).round().min(255.0) as u8;
                    break;
                }
            }
            out.push(shade);
        }
    }
    write_atomic(path, &out)
}
