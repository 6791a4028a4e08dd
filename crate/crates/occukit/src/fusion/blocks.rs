//! Forward reference implementations of the fusion blocks: radar pillar
//! encoding, height self-attention, local adaptive fusion, multi-head
//! deformable attention with its global cross-attention wrapper, temporal
//! alignment, the image-to-voxel lift, and the occupancy head.
//!
//! Blocks are pure functions of `(inputs, BlockWeights)`. Convolutions are
//! 3x3x3, stride 1, zero padded. Where a spec contract constrains an
//! intermediate value, the block exposes a `_trace` variant returning all
//! intermediates.

use crate::error::{Error, Result};
use crate::fusion::ops::{
    add_planes, add_volumes, conv3d, linear_into, linear_per_cell, map_volume, relu, sigmoid,
    softmax, softplus,
};
use crate::fusion::weights::{BlockWeights, Tensor, PILLAR_POINT_DIMS};
use crate::fusion::FusionConfig;
use crate::geometry::{bilinear_sample_one, trilinear_sample_one, CameraModel, LabeledPointCloud, RigidPose};
use crate::grid::{c2h, h2c, FeaturePlane, FeatureVolume, GridSpec, VoxelGrid};

// ---------------------------------------------------------------------------
// Radar pillar encoder
// ---------------------------------------------------------------------------

/// Encode radar points into a BEV feature plane: per-point decoration with
/// pillar-center offsets, a shared ReLU MLP, and max-pooling per pillar.
/// Empty pillars stay zero.
pub fn pillar_encode(
    radar_pts: &LabeledPointCloud,
    spec: &GridSpec,
    w: &BlockWeights,
) -> Result<FeaturePlane> {
    if !radar_pts.has_radar_channels() {
        return Err(Error::invalid(
            "pillar encoder",
            "points must carry vx/vy/amp/snr/t radar channels",
        ));
    }
    let weight = w.get("pillar.mlp.weight")?;
    if weight.dims().len() != 2 || weight.dims()[1] != PILLAR_POINT_DIMS {
        return Err(Error::BadWeights(format!(
            "pillar.mlp.weight dims {:?}, expected (C, {PILLAR_POINT_DIMS})",
            weight.dims()
        )));
    }
    let channels = weight.dims()[0];
    let bias = w.get_with_dims("pillar.mlp.bias", &[channels])?;

    let (nx, ny, _) = spec.dims();
    let mut plane = FeaturePlane::zeros(channels, ny, nx);
    let mut touched = vec![false; ny * nx];
    let velocities = radar_pts.velocities().unwrap();
    let amplitudes = radar_pts.amplitudes().unwrap();
    let snrs = radar_pts.snrs().unwrap();
    let timestamps = radar_pts.timestamps().unwrap();

    let mut encoded = vec![0.0; channels];
    for (i, &p) in radar_pts.positions().iter().enumerate() {
        let Some((ix, iy)) = spec.xy_to_cell(p[0], p[1]) else {
            continue;
        };
        let (cx, cy) = spec.cell_center_xy(ix, iy);
        let features = [
            p[0],
            p[1],
            p[2],
            velocities[i][0],
            velocities[i][1],
            amplitudes[i],
            snrs[i],
            timestamps[i],
            p[0] - cx,
            p[1] - cy,
        ];
        linear_into(weight, bias, &features, &mut encoded);
        let cell = iy * nx + ix;
        for (c, &v) in encoded.iter().enumerate() {
            let v = relu(v);
            if !touched[cell] || v > plane.get(c, iy, ix) {
                plane.set(c, iy, ix, v);
            }
        }
        touched[cell] = true;
    }
    Ok(plane)
}

// ---------------------------------------------------------------------------
// Radar height self-attention
// ---------------------------------------------------------------------------

/// Intermediates of the height self-attention block.
#[derive(Debug, Clone)]
pub struct RhsTrace {
    /// BEV features expanded along Z; every Z-slice equals the input plane.
    pub initial: FeatureVolume,
    /// Sigmoid attention weights over the encoded vertical context.
    pub gate: FeatureVolume,
    /// `initial` modulated by the gate, before the attention convolution.
    pub modulated: FeatureVolume,
    /// Convolved attention branch.
    pub attended: FeatureVolume,
    /// Final radar voxel features.
    pub output: FeatureVolume,
}

fn broadcast_height_encoding(pos: &Tensor, c: usize, h: usize, w: usize, z: usize) -> FeatureVolume {
    FeatureVolume::from_fn(c, h, w, z, |ci, _, _, zi| pos.data()[ci * z + zi])
}

pub fn rhs_trace(plane: &FeaturePlane, w: &BlockWeights, cfg: &FusionConfig) -> Result<RhsTrace> {
    let (c, h, wd, z) = (cfg.channels, cfg.height, cfg.width, cfg.depth);
    if (plane.channels, plane.h, plane.w) != (c, h, wd) {
        return Err(Error::shape(
            "rhs",
            format!(
                "plane is {}x{}x{}, config wants {c}x{h}x{wd}",
                plane.channels, plane.h, plane.w
            ),
        ));
    }
    let pos = w.get_with_dims("rhs.pos_enc", &[c, z])?;

    let initial = FeatureVolume::from_fn(c, h, wd, z, |ci, hi, wi, _| plane.get(ci, hi, wi));
    let encoded = add_volumes(&initial, &broadcast_height_encoding(pos, c, h, wd, z))?;

    let g0 = conv3d(&encoded, w.get("rhs.gate.conv0.kernel")?, w.get("rhs.gate.conv0.bias")?)?;
    let g1 = conv3d(
        &map_volume(&g0, relu),
        w.get("rhs.gate.conv1.kernel")?,
        w.get("rhs.gate.conv1.bias")?,
    )?;
    let gate = map_volume(&g1, sigmoid);

    let mut modulated = initial.clone();
    for (m, g) in modulated.data_mut().iter_mut().zip(gate.data()) {
        *m *= g;
    }
    let attended = conv3d(&modulated, w.get("rhs.att.conv.kernel")?, w.get("rhs.att.conv.bias")?)?;

    let enc_in = add_volumes(&initial, &attended)?;
    let e0 = conv3d(&enc_in, w.get("rhs.enc.conv0.kernel")?, w.get("rhs.enc.conv0.bias")?)?;
    let output = conv3d(
        &map_volume(&e0, softplus),
        w.get("rhs.enc.conv1.kernel")?,
        w.get("rhs.enc.conv1.bias")?,
    )?;

    Ok(RhsTrace {
        initial,
        gate,
        modulated,
        attended,
        output,
    })
}

/// Height self-attention: expand the BEV plane along Z, gate it with
/// height-aware attention, and refine with the radar encoder stack.
pub fn rhs(plane: &FeaturePlane, w: &BlockWeights, cfg: &FusionConfig) -> Result<FeatureVolume> {
    Ok(rhs_trace(plane, w, cfg)?.output)
}

// ---------------------------------------------------------------------------
// Local adaptive fusion
// ---------------------------------------------------------------------------

/// Voxel-wise adaptive blend of camera and radar volumes. Returns
/// `(fused, weights)` where `weights` is the 1-channel sigmoid map and
/// `fused = w * camera + (1 - w) * radar`.
pub fn laf(
    f_c: &FeatureVolume,
    f_r: &FeatureVolume,
    w: &BlockWeights,
) -> Result<(FeatureVolume, FeatureVolume)> {
    if f_c.dims() != f_r.dims() {
        return Err(Error::shape(
            "laf",
            format!("camera {:?} vs radar {:?}", f_c.dims(), f_r.dims()),
        ));
    }
    let (c, h, wd, z) = f_c.dims();
    let mut concat = FeatureVolume::zeros(2 * c, h, wd, z);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..wd {
                for zi in 0..z {
                    concat.set(ci, hi, wi, zi, f_c.get(ci, hi, wi, zi));
                    concat.set(c + ci, hi, wi, zi, f_r.get(ci, hi, wi, zi));
                }
            }
        }
    }
    let logits = conv3d(&concat, w.get("laf.weight_net.kernel")?, w.get("laf.weight_net.bias")?)?;
    if logits.channels != 1 {
        return Err(Error::BadWeights(
            "laf.weight_net must produce a single channel".to_string(),
        ));
    }
    let weights = map_volume(&logits, sigmoid);
    let mut fused = FeatureVolume::zeros(c, h, wd, z);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..wd {
                for zi in 0..z {
                    let a = weights.get(0, hi, wi, zi);
                    fused.set(
                        ci,
                        hi,
                        wi,
                        zi,
                        a * f_c.get(ci, hi, wi, zi) + (1.0 - a) * f_r.get(ci, hi, wi, zi),
                    );
                }
            }
        }
    }
    Ok((fused, weights))
}

// ---------------------------------------------------------------------------
// Multi-head deformable attention
// ---------------------------------------------------------------------------

struct MdaHead {
    offset_weight: Tensor,
    offset_bias: Tensor,
    att_weight: Tensor,
    att_bias: Tensor,
    value_weight: Tensor,
    value_bias: Tensor,
}

/// Parameters of one deformable-attention instance, extracted from a
/// [`BlockWeights`] prefix.
pub struct MdaWeights {
    channels: usize,
    points: usize,
    head_dim: usize,
    heads: Vec<MdaHead>,
    out_weight: Tensor,
    out_bias: Tensor,
}

impl MdaWeights {
    pub fn from_block(
        w: &BlockWeights,
        prefix: &str,
        channels: usize,
        heads: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || points == 0 {
            return Err(Error::BadWeights(format!(
                "{prefix}: head and point counts must be positive"
            )));
        }
        if !channels.is_multiple_of(heads) {
            return Err(Error::BadWeights(format!(
                "{prefix}: {channels} channels not divisible by {heads} heads"
            )));
        }
        let head_dim = channels / heads;
        let mut head_weights = Vec::with_capacity(heads);
        for h in 0..heads {
            head_weights.push(MdaHead {
                offset_weight: w
                    .get_with_dims(&format!("{prefix}.h{h}.offset.weight"), &[points * 2, channels])?
                    .clone(),
                offset_bias: w
                    .get_with_dims(&format!("{prefix}.h{h}.offset.bias"), &[points * 2])?
                    .clone(),
                att_weight: w
                    .get_with_dims(&format!("{prefix}.h{h}.att.weight"), &[points, channels])?
                    .clone(),
                att_bias: w
                    .get_with_dims(&format!("{prefix}.h{h}.att.bias"), &[points])?
                    .clone(),
                value_weight: w
                    .get_with_dims(&format!("{prefix}.h{h}.value.weight"), &[head_dim, channels])?
                    .clone(),
                value_bias: w
                    .get_with_dims(&format!("{prefix}.h{h}.value.bias"), &[head_dim])?
                    .clone(),
            });
        }
        Ok(MdaWeights {
            channels,
            points,
            head_dim,
            heads: head_weights,
            out_weight: w
                .get_with_dims(&format!("{prefix}.out.weight"), &[channels, channels])?
                .clone(),
            out_bias: w.get_with_dims(&format!("{prefix}.out.bias"), &[channels])?.clone(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// One attention instance bound to a value plane, with per-head value
/// projections precomputed so single-point queries stay cheap.
pub struct MdaContext<'a> {
    weights: &'a MdaWeights,
    projected: Vec<FeaturePlane>,
    offset_clamp: f64,
}

impl<'a> MdaContext<'a> {
    pub fn new(weights: &'a MdaWeights, value: &FeaturePlane) -> Result<Self> {
        if value.channels != weights.channels {
            return Err(Error::shape(
                "mda",
                format!(
                    "value plane has {} channels, weights expect {}",
                    value.channels, weights.channels
                ),
            ));
        }
        let projected = weights
            .heads
            .iter()
            .map(|h| linear_per_cell(value, &h.value_weight, &h.value_bias))
            .collect::<Result<Vec<_>>>()?;
        // Raw offsets are in feature-plane cells, clamped to +-(H+W)/4.
        let offset_clamp = (value.h + value.w) as f64 / 4.0;
        Ok(MdaContext {
            weights,
            projected,
            offset_clamp,
        })
    }

    /// Attend at one reference point. `query_plus_pos` must already carry
    /// the positional encoding.
    pub fn attend(&self, query_plus_pos: &FeaturePlane, at: (f64, f64)) -> Vec<f64> {
        let w = self.weights;
        let (q, _) = bilinear_sample_one(query_plus_pos, at);
        let mut concat = vec![0.0; w.channels];
        let mut offsets = vec![0.0; w.points * 2];
        let mut logits = vec![0.0; w.points];
        for (h, head) in w.heads.iter().enumerate() {
            linear_into(&head.offset_weight, &head.offset_bias, &q, &mut offsets);
            linear_into(&head.att_weight, &head.att_bias, &q, &mut logits);
            softmax(&mut logits);
            let out = &mut concat[h * w.head_dim..(h + 1) * w.head_dim];
            for s in 0..w.points {
                let dh = offsets[2 * s].clamp(-self.offset_clamp, self.offset_clamp);
                let dw = offsets[2 * s + 1].clamp(-self.offset_clamp, self.offset_clamp);
                let (sampled, _) =
                    bilinear_sample_one(&self.projected[h], (at.0 + dh, at.1 + dw));
                for (o, v) in out.iter_mut().zip(sampled) {
                    *o += logits[s] * v;
                }
            }
        }
        let mut out = vec![0.0; w.channels];
        linear_into(&w.out_weight, &w.out_bias, &concat, &mut out);
        out
    }
}

/// Multi-head deformable attention at explicit reference points. Per
/// point: offsets and attention logits come from the query (plus
/// positional encoding) at that point; each head samples its projected
/// value plane at the offset positions and mixes them by the softmaxed
/// logits; heads are concatenated through the output projection.
pub fn mda(
    query: &FeaturePlane,
    value: &FeaturePlane,
    pos_enc: &FeaturePlane,
    ref_points: &[(f64, f64)],
    weights: &MdaWeights,
) -> Result<Vec<Vec<f64>>> {
    let query_sum = add_planes(query, pos_enc)?;
    let ctx = MdaContext::new(weights, value)?;
    Ok(ref_points.iter().map(|&p| ctx.attend(&query_sum, p)).collect())
}

/// [`mda`] evaluated at every cell center of the query plane, reassembled
/// as a plane.
pub fn mda_plane(
    query: &FeaturePlane,
    value: &FeaturePlane,
    pos_enc: &FeaturePlane,
    weights: &MdaWeights,
) -> Result<FeaturePlane> {
    let refs: Vec<(f64, f64)> = (0..query.h)
        .flat_map(|h| (0..query.w).map(move |w| (h as f64, w as f64)))
        .collect();
    let outputs = mda(query, value, pos_enc, &refs, weights)?;
    let mut out = FeaturePlane::zeros(weights.channels, query.h, query.w);
    for (i, feature) in outputs.iter().enumerate() {
        let (h, w) = (i / query.w, i % query.w);
        for (c, &v) in feature.iter().enumerate() {
            out.set(c, h, w, v);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Global cross-attention fusion
// ---------------------------------------------------------------------------

fn tensor_as_plane(t: &Tensor) -> Result<FeaturePlane> {
    let d = t.dims();
    if d.len() != 3 {
        return Err(Error::BadWeights(format!(
            "positional encoding dims {d:?} are not (C, H, W)"
        )));
    }
    FeaturePlane::from_vec(d[0], d[1], d[2], t.data().to_vec())
}

/// Dual-stream deformable cross-attention over BEV projections of the
/// fused, camera and radar volumes, folded back to 3D with a residual on
/// the fused input.
pub fn gcf(
    f_laf: &FeatureVolume,
    f_c: &FeatureVolume,
    f_r: &FeatureVolume,
    w: &BlockWeights,
    cfg: &FusionConfig,
) -> Result<FeatureVolume> {
    let dims = (cfg.channels, cfg.height, cfg.width, cfg.depth);
    for (name, vol) in [("fused", f_laf), ("camera", f_c), ("radar", f_r)] {
        if vol.dims() != dims {
            return Err(Error::shape(
                "gcf",
                format!("{name} volume is {:?}, config wants {dims:?}", vol.dims()),
            ));
        }
    }
    let cp = cfg.bev_channels();
    let project = |vol: &FeatureVolume, stream: &str| -> Result<FeaturePlane> {
        linear_per_cell(
            &h2c(vol),
            w.get_with_dims(&format!("gcf.proj_{stream}.weight"), &[cp, cp])?,
            w.get_with_dims(&format!("gcf.proj_{stream}.bias"), &[cp])?,
        )
    };
    let bev_query = project(f_laf, "laf")?;
    let bev_c = project(f_c, "c")?;
    let bev_r = project(f_r, "r")?;
    let pos_c = tensor_as_plane(w.get_with_dims("gcf.pos_c", &[cp, cfg.height, cfg.width])?)?;
    let pos_r = tensor_as_plane(w.get_with_dims("gcf.pos_r", &[cp, cfg.height, cfg.width])?)?;

    let mda_c = MdaWeights::from_block(w, "gcf.mda_c", cp, cfg.heads, cfg.points)?;
    let mda_r = MdaWeights::from_block(w, "gcf.mda_r", cp, cfg.heads, cfg.points)?;
    let stream_c = mda_plane(&bev_query, &bev_c, &pos_c, &mda_c)?;
    let stream_r = mda_plane(&bev_query, &bev_r, &pos_r, &mda_r)?;
    let summed = add_planes(&stream_c, &stream_r)?;

    let folded = c2h(&summed, cfg.depth)?;
    let residual = add_volumes(&folded, f_laf)?;
    conv3d(&residual, w.get("gcf.out.conv.kernel")?, w.get("gcf.out.conv.bias")?)
}

// ---------------------------------------------------------------------------
// Temporal fusion
// ---------------------------------------------------------------------------

/// Intermediates of temporal fusion: one aligned volume per past frame.
#[derive(Debug, Clone)]
pub struct TemporalTrace {
    pub aligned: Vec<FeatureVolume>,
    pub fused: FeatureVolume,
}

fn batch_norm(vol: &FeatureVolume, scale: &Tensor, shift: &Tensor) -> FeatureVolume {
    FeatureVolume::from_fn(vol.channels, vol.h, vol.w, vol.z, |c, h, w, z| {
        scale.data()[c] * vol.get(c, h, w, z) + shift.data()[c]
    })
}

/// Align past frames onto the current one and fuse.
///
/// `volumes[0]` is the current frame; `volumes[k]` is the frame `k` steps
/// back. `poses[k-1]` maps current-frame coordinates into the frame of
/// `volumes[k]`. Reference points are current-frame voxel centers; past
/// features are trilinearly sampled at the transformed points, with
/// out-of-range samples zero. The concatenated stack runs through the
/// bottleneck (conv, batch norm, ReLU, twice).
pub fn temporal_fuse_trace(
    volumes: &[FeatureVolume],
    poses: &[RigidPose],
    grid: &GridSpec,
    w: &BlockWeights,
) -> Result<TemporalTrace> {
    let Some(current) = volumes.first() else {
        return Err(Error::CountMismatch("no volumes to fuse".to_string()));
    };
    if poses.len() + 1 != volumes.len() {
        return Err(Error::CountMismatch(format!(
            "{} volumes need {} relative poses, got {}",
            volumes.len(),
            volumes.len() - 1,
            poses.len()
        )));
    }
    let (c, h, wd, z) = current.dims();
    if grid.volume_dims() != (h, wd, z) {
        return Err(Error::shape(
            "temporal",
            format!(
                "grid volume dims {:?} vs feature dims {:?}",
                grid.volume_dims(),
                (h, wd, z)
            ),
        ));
    }
    for vol in volumes {
        if vol.dims() != current.dims() {
            return Err(Error::shape(
                "temporal",
                format!("frame dims {:?} vs {:?}", vol.dims(), current.dims()),
            ));
        }
    }

    let mut aligned = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        let past = &volumes[k + 1];
        let mut vol = FeatureVolume::zeros(c, h, wd, z);
        for hi in 0..h {
            for wi in 0..wd {
                for zi in 0..z {
                    let center = grid.voxel_center(wi, hi, zi);
                    let moved = pose.apply(center);
                    let (sampled, _) = trilinear_sample_one(past, grid.volume_coords(moved));
                    for (ci, &v) in sampled.iter().enumerate() {
                        vol.set(ci, hi, wi, zi, v);
                    }
                }
            }
        }
        aligned.push(vol);
    }

    let t = volumes.len();
    let mut stack = FeatureVolume::zeros(t * c, h, wd, z);
    for (slot, vol) in std::iter::once(current).chain(aligned.iter()).enumerate() {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..wd {
                    for zi in 0..z {
                        stack.set(slot * c + ci, hi, wi, zi, vol.get(ci, hi, wi, zi));
                    }
                }
            }
        }
    }

    let k0 = w.get_with_dims("temporal.conv0.kernel", &[c, t * c, 3, 3, 3])?;
    let b0 = conv3d(&stack, k0, w.get("temporal.conv0.bias")?)?;
    let n0 = batch_norm(&b0, w.get_with_dims("temporal.norm0.scale", &[c])?, w.get_with_dims("temporal.norm0.shift", &[c])?);
    let a0 = map_volume(&n0, relu);
    let b1 = conv3d(&a0, w.get_with_dims("temporal.conv1.kernel", &[c, c, 3, 3, 3])?, w.get("temporal.conv1.bias")?)?;
    let n1 = batch_norm(&b1, w.get_with_dims("temporal.norm1.scale", &[c])?, w.get_with_dims("temporal.norm1.shift", &[c])?);
    let fused = map_volume(&n1, relu);

    Ok(TemporalTrace { aligned, fused })
}

pub fn temporal_fuse(
    volumes: &[FeatureVolume],
    poses: &[RigidPose],
    grid: &GridSpec,
    w: &BlockWeights,
) -> Result<FeatureVolume> {
    Ok(temporal_fuse_trace(volumes, poses, grid, w)?.fused)
}

// ---------------------------------------------------------------------------
// Image-to-voxel lift
// ---------------------------------------------------------------------------

/// Single-scale lift of per-camera feature planes into the voxel volume:
/// each voxel center is projected into every camera, deformable attention
/// samples the visible planes at the projected location (scaled into
/// feature coordinates), and visible cameras are averaged. Voxels seen by
/// no camera stay zero.
pub fn image_lift(
    planes: &[FeaturePlane],
    cams: &[CameraModel],
    grid: &GridSpec,
    w: &BlockWeights,
    cfg: &FusionConfig,
) -> Result<FeatureVolume> {
    if planes.len() != cams.len() {
        return Err(Error::CountMismatch(format!(
            "{} feature planes for {} cameras",
            planes.len(),
            cams.len()
        )));
    }
    for plane in planes {
        if plane.channels != cfg.channels {
            return Err(Error::shape(
                "image lift",
                format!(
                    "feature plane has {} channels, config wants {}",
                    plane.channels, cfg.channels
                ),
            ));
        }
    }
    let (h, wd, z) = grid.volume_dims();
    if (h, wd, z) != (cfg.height, cfg.width, cfg.depth) {
        return Err(Error::shape(
            "image lift",
            format!(
                "grid volume dims {:?} vs config {:?}",
                (h, wd, z),
                (cfg.height, cfg.width, cfg.depth)
            ),
        ));
    }
    let weights = MdaWeights::from_block(w, "lift.mda", cfg.channels, cfg.heads, cfg.points)?;
    let contexts = planes
        .iter()
        .map(|p| MdaContext::new(&weights, p))
        .collect::<Result<Vec<_>>>()?;

    let mut out = FeatureVolume::zeros(cfg.channels, h, wd, z);
    let mut acc = vec![0.0; cfg.channels];
    for hi in 0..h {
        for wi in 0..wd {
            for zi in 0..z {
                let center = grid.voxel_center(wi, hi, zi);
                acc.iter_mut().for_each(|v| *v = 0.0);
                let mut visible = 0usize;
                for ((cam, plane), ctx) in cams.iter().zip(planes).zip(&contexts) {
                    let Some((u, v, _)) = cam.project(center) else {
                        continue;
                    };
                    let at = (
                        v * plane.h as f64 / cam.height as f64,
                        u * plane.w as f64 / cam.width as f64,
                    );
                    let feature = ctx.attend(plane, at);
                    for (a, f) in acc.iter_mut().zip(feature) {
                        *a += f;
                    }
                    visible += 1;
                }
                if visible > 0 {
                    for (ci, a) in acc.iter().enumerate() {
                        out.set(ci, hi, wi, zi, a / visible as f64);
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Occupancy head
// ---------------------------------------------------------------------------

/// Per-voxel class probabilities in volume order:
/// `data[((h * W + w) * Z + z) * K + k]`.
#[derive(Debug, Clone)]
pub struct ClassProbs {
    pub num_classes: usize,
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub data: Vec<f64>,
}

impl ClassProbs {
    pub fn num_voxels(&self) -> usize {
        self.h * self.w * self.z
    }

    pub fn probs_at(&self, h: usize, w: usize, z: usize) -> &[f64] {
        let i = ((h * self.w + w) * self.z + z) * self.num_classes;
        &self.data[i..i + self.num_classes]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Argmax labels as a voxel grid over `spec` (ties to the smallest
    /// class id).
    pub fn argmax_grid(&self, spec: &GridSpec) -> Result<VoxelGrid> {
        if spec.volume_dims() != (self.h, self.w, self.z) {
            return Err(Error::shape(
                "argmax grid",
                format!(
                    "grid volume dims {:?} vs probs {:?}",
                    spec.volume_dims(),
                    (self.h, self.w, self.z)
                ),
            ));
        }
        let mut grid = VoxelGrid::new(spec.clone(), self.num_classes as u32)?;
        for h in 0..self.h {
            for w in 0..self.w {
                for z in 0..self.z {
                    let probs = self.probs_at(h, w, z);
                    let mut best = 0usize;
                    for (k, &p) in probs.iter().enumerate() {
                        if p > probs[best] {
                            best = k;
                        }
                    }
                    grid.set_label(w, h, z, best as u8)?;
                }
            }
        }
        Ok(grid)
    }
}

/// Map each voxel's feature vector through the linear stack (ReLU between
/// layers, none after the last) and a class softmax. Layers are the
/// `head.l<i>.*` tensors, applied in index order.
pub fn occupancy_head(vol: &FeatureVolume, w: &BlockWeights) -> Result<ClassProbs> {
    let mut layers: Vec<(&Tensor, &Tensor)> = Vec::new();
    let mut index = 0usize;
    while w.contains(&format!("head.l{index}.weight")) {
        let weight = w.get(&format!("head.l{index}.weight"))?;
        if weight.dims().len() != 2 {
            return Err(Error::BadWeights(format!(
                "head.l{index}.weight dims {:?} are not a matrix",
                weight.dims()
            )));
        }
        let bias = w.get_with_dims(&format!("head.l{index}.bias"), &[weight.dims()[0]])?;
        layers.push((weight, bias));
        index += 1;
    }
    if layers.is_empty() {
        return Err(Error::BadWeights("head has no layers".to_string()));
    }
    let mut expected = vol.channels;
    for (i, (weight, _)) in layers.iter().enumerate() {
        if weight.dims()[1] != expected {
            return Err(Error::BadWeights(format!(
                "head.l{i}.weight accepts {} inputs, got {expected}",
                weight.dims()[1]
            )));
        }
        expected = weight.dims()[0];
    }
    let num_classes = expected;

    let (h, wd, z) = vol.spatial_dims();
    let mut out = ClassProbs {
        num_classes,
        h,
        w: wd,
        z,
        data: vec![0.0; h * wd * z * num_classes],
    };
    for hi in 0..h {
        for wi in 0..wd {
            for zi in 0..z {
                let mut x: Vec<f64> = (0..vol.channels).map(|c| vol.get(c, hi, wi, zi)).collect();
                for (li, (weight, bias)) in layers.iter().enumerate() {
                    let mut y = vec![0.0; weight.dims()[0]];
                    linear_into(weight, bias, &x, &mut y);
                    if li + 1 < layers.len() {
                        for v in y.iter_mut() {
                            *v = relu(*v);
                        }
                    }
                    x = y;
                }
                softmax(&mut x);
                let base = ((hi * wd + wi) * z + zi) * num_classes;
                out.data[base..base + num_classes].copy_from_slice(&x);
            }
        }
    }
    Ok(out)
}
