//! Shared numeric kernels for the fusion blocks: 3x3x3 convolution,
//! per-cell linear maps, and stable activations.

use crate::error::{Error, Result};
use crate::fusion::weights::Tensor;
use crate::grid::{FeaturePlane, FeatureVolume};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large |x|.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// In-place softmax with max subtraction.
pub fn softmax(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// `weight (out, in) * x + bias`, written into `out`.
pub fn linear_into(weight: &Tensor, bias: &Tensor, x: &[f64], out: &mut [f64]) {
    let (n_out, n_in) = (weight.dims()[0], weight.dims()[1]);
    debug_assert_eq!(x.len(), n_in);
    debug_assert_eq!(out.len(), n_out);
    let w = weight.data();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = bias.data()[o];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *out_v = acc;
    }
}

/// Channel-preserving-or-mapping 3x3x3 convolution with stride 1 and zero
/// padding. Kernel dims are `(C_out, C_in, 3, 3, 3)` over `(h, w, z)`.
pub fn conv3d(input: &FeatureVolume, kernel: &Tensor, bias: &Tensor) -> Result<FeatureVolume> {
    let kd = kernel.dims();
    if kd.len() != 5 || kd[2] != 3 || kd[3] != 3 || kd[4] != 3 {
        return Err(Error::BadWeights(format!(
            "conv kernel dims {kd:?} are not (C_out, C_in, 3, 3, 3)"
        )));
    }
    let (c_out, c_in) = (kd[0], kd[1]);
    if input.channels != c_in {
        return Err(Error::shape(
            "conv3d",
            format!("input has {} channels, kernel expects {c_in}", input.channels),
        ));
    }
    if bias.dims() != [c_out] {
        return Err(Error::BadWeights(format!(
            "conv bias dims {:?} do not match {c_out} output channels",
            bias.dims()
        )));
    }
    let (h, w, z) = (input.h, input.w, input.z);
    let k = kernel.data();
    let mut out = FeatureVolume::zeros(c_out, h, w, z);
    for co in 0..c_out {
        for ih in 0..h {
            for iw in 0..w {
                for iz in 0..z {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for (dh, kh) in (-1i64..=1).zip(0usize..3) {
                            let sh = ih as i64 + dh;
                            if sh < 0 || sh >= h as i64 {
                                continue;
                            }
                            for (dw, kw) in (-1i64..=1).zip(0usize..3) {
                                let sw = iw as i64 + dw;
                                if sw < 0 || sw >= w as i64 {
                                    continue;
                                }
                                for (dz, kz) in (-1i64..=1).zip(0usize..3) {
                                    let sz = iz as i64 + dz;
                                    if sz < 0 || sz >= z as i64 {
                                        continue;
                                    }
                                    let kv = k[(((co * c_in + ci) * 3 + kh) * 3 + kw) * 3 + kz];
                                    acc += kv
                                        * input.get(ci, sh as usize, sw as usize, sz as usize);
                                }
                            }
                        }
                    }
                    out.set(co, ih, iw, iz, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Apply an activation elementwise to a volume.
pub fn map_volume(vol: &FeatureVolume, f: impl Fn(f64) -> f64) -> FeatureVolume {
    let mut out = vol.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

/// Per-cell linear projection of a plane: `out[:, h, w] = W p[:, h, w] + b`.
pub fn linear_per_cell(plane: &FeaturePlane, weight: &Tensor, bias: &Tensor) -> Result<FeaturePlane> {
    let wd = weight.dims();
    if wd.len() != 2 || wd[1] != plane.channels {
        return Err(Error::BadWeights(format!(
            "projection dims {wd:?} do not accept {} channels",
            plane.channels
        )));
    }
    if bias.dims() != [wd[0]] {
        return Err(Error::BadWeights(format!(
            "projection bias dims {:?} do not match {} outputs",
            bias.dims(),
            wd[0]
        )));
    }
    let mut out = FeaturePlane::zeros(wd[0], plane.h, plane.w);
    let mut x = vec![0.0; plane.channels];
    let mut y = vec![0.0; wd[0]];
    for h in 0..plane.h {
        for w in 0..plane.w {
            for (c, xv) in x.iter_mut().enumerate() {
                *xv = plane.get(c, h, w);
            }
            linear_into(weight, bias, &x, &mut y);
            for (c, &yv) in y.iter().enumerate() {
                out.set(c, h, w, yv);
            }
        }
    }
    Ok(out)
}

/// Elementwise sum of two planes.
pub fn add_planes(a: &FeaturePlane, b: &FeaturePlane) -> Result<FeaturePlane> {
    if (a.channels, a.h, a.w) != (b.channels, b.h, b.w) {
        return Err(Error::shape(
            "plane add",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.channels, a.h, a.w, b.channels, b.h, b.w
            ),
        ));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Elementwise sum of two volumes.
pub fn add_volumes(a: &FeatureVolume, b: &FeatureVolume) -> Result<FeatureVolume> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "volume add",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Identity 3x3x3 kernel (center tap one, channel-diagonal) for tests and
/// rigged configurations.
pub fn identity_conv_kernel(channels: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![channels, channels, 3, 3, 3]);
    for c in 0..channels {
        let idx = (((c * channels + c) * 3 + 1) * 3 + 1) * 3 + 1;
        t.data_mut()[idx] = 1.0;
    }
    t
}

/// Identity square matrix tensor.
pub fn identity_matrix(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}
