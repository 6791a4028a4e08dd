//! Named parameter tensors for the fusion blocks, their seeded
//! initialization, and the MOBW container format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::io::write_atomic;

pub const MOBW_MAGIC: &[u8; 4] = b"MOBW";
const NAME_WIDTH: usize = 32;

/// Standard deviation of the seeded Gaussian initialization.
pub const INIT_STD: f64 = 0.02;

/// Dense f64 tensor with explicit dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "tensor",
                format!("{} values for dims {:?}", data.len(), dims),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::BadWeights(format!(
                "non-finite value in tensor with dims {dims:?}"
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Explicit parameter bundle for every fusion block, keyed by tensor name.
/// No hidden state: a block's output is a pure function of its inputs and
/// these tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl BlockWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !name.is_ascii() || name.len() > NAME_WIDTH {
            return Err(Error::BadWeights(format!(
                "tensor name {name:?} must be ASCII and at most {NAME_WIDTH} bytes"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::BadWeights(format!("missing tensor {name:?}")))
    }

    /// Fetch a tensor and check its dims against the block's contract.
    pub fn get_with_dims(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.dims() != dims {
            return Err(Error::BadWeights(format!(
                "tensor {name:?} has dims {:?}, block expects {:?}",
                t.dims(),
                dims
            )));
        }
        Ok(t)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::BadWeights(format!("missing tensor {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Every parameter tensor of every block, drawn from a seeded
    /// N(0, 0.02) in a fixed creation order so a seed fully determines the
    /// bundle.
    pub fn init(cfg: &FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut w = BlockWeights::new();
        let mut add = |w: &mut BlockWeights, name: &str, dims: Vec<usize>| -> Result<()> {
            let len: usize = dims.iter().product();
            let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            w.insert(name, Tensor::new(dims, data)?)
        };

        let c = cfg.channels;
        let (h, wd, z) = (cfg.height, cfg.width, cfg.depth);
        let cp = cfg.bev_channels();
        let conv = [c, c, 3, 3, 3];

        add(&mut w, "pillar.mlp.weight", vec![c, PILLAR_POINT_DIMS])?;
        add(&mut w, "pillar.mlp.bias", vec![c])?;

        add(&mut w, "rhs.pos_enc", vec![c, z])?;
        for name in ["rhs.gate.conv0", "rhs.gate.conv1", "rhs.att.conv", "rhs.enc.conv0", "rhs.enc.conv1"] {
            add(&mut w, &format!("{name}.kernel"), conv.to_vec())?;
            add(&mut w, &format!("{name}.bias"), vec![c])?;
        }

        add(&mut w, "laf.weight_net.kernel", vec![1, 2 * c, 3, 3, 3])?;
        add(&mut w, "laf.weight_net.bias", vec![1])?;

        for stream in ["laf", "c", "r"] {
            add(&mut w, &format!("gcf.proj_{stream}.weight"), vec![cp, cp])?;
            add(&mut w, &format!("gcf.proj_{stream}.bias"), vec![cp])?;
        }
        add(&mut w, "gcf.pos_c", vec![cp, h, wd])?;
        add(&mut w, "gcf.pos_r", vec![cp, h, wd])?;
        for stream in ["c", "r"] {
            add_mda(&mut add, &mut w, &format!("gcf.mda_{stream}"), cp, cfg)?;
        }
        add(&mut w, "gcf.out.conv.kernel", conv.to_vec())?;
        add(&mut w, "gcf.out.conv.bias", vec![c])?;

        add(
            &mut w,
            "temporal.conv0.kernel",
            vec![c, cfg.temporal_frames * c, 3, 3, 3],
        )?;
        add(&mut w, "temporal.conv0.bias", vec![c])?;
        add(&mut w, "temporal.norm0.scale", vec![c])?;
        add(&mut w, "temporal.norm0.shift", vec![c])?;
        add(&mut w, "temporal.conv1.kernel", conv.to_vec())?;
        add(&mut w, "temporal.conv1.bias", vec![c])?;
        add(&mut w, "temporal.norm1.scale", vec![c])?;
        add(&mut w, "temporal.norm1.shift", vec![c])?;
        // Inference-form norm scales center on 1 (a zero-centered scale
        // would null the features); the seeded draw perturbs around it.
        for name in ["temporal.norm0.scale", "temporal.norm1.scale"] {
            for v in w.get_mut(name)?.data_mut() {
                *v += 1.0;
            }
        }

        add_mda(&mut add, &mut w, "lift.mda", c, cfg)?;

        add(&mut w, "head.l0.weight", vec![c, c])?;
        add(&mut w, "head.l0.bias", vec![c])?;
        add(&mut w, "head.l1.weight", vec![cfg.num_classes, c])?;
        add(&mut w, "head.l1.bias", vec![cfg.num_classes])?;

        Ok(w)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MOBW_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let mut padded = name.as_bytes().to_vec();
            padded.resize(NAME_WIDTH, b' ');
            out.extend_from_slice(&padded);
            out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
            for &d in &tensor.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8], path_for_errors: &Path) -> Result<Self> {
        let err = |detail: String| Error::BadHeader {
            format: "MOBW",
            path: path_for_errors.display().to_string(),
            detail,
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(err(format!("truncated at offset {pos}")));
            }
            let out = &buf[pos..pos + n];
            pos += n;
            Ok(out)
        };
        if take(4)? != MOBW_MAGIC {
            return Err(err("wrong magic bytes".to_string()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(err(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut weights = BlockWeights::new();
        for _ in 0..count {
            let raw = take(NAME_WIDTH)?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| err("non-ASCII tensor name".to_string()))?
                .trim_end_matches(' ')
                .to_string();
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            weights.insert(name, Tensor::new(dims, data)?)?;
        }
        if pos != buf.len() {
            return Err(err("trailing bytes after payload".to_string()));
        }
        Ok(weights)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&buf, path)
    }
}

/// Input feature width of the pillar point MLP: the raw radar channels
/// (x, y, z, vx, vy, amp, snr, t) plus the in-pillar center offsets
/// (dx, dy).
pub const PILLAR_POINT_DIMS: usize = 10;

fn add_mda(
    add: &mut impl FnMut(&mut BlockWeights, &str, Vec<usize>) -> Result<()>,
    w: &mut BlockWeights,
    prefix: &str,
    channels: usize,
    cfg: &FusionConfig,
) -> Result<()> {
    if !channels.is_multiple_of(cfg.heads) {
        return Err(Error::BadWeights(format!(
            "{prefix}: {channels} channels not divisible by {} heads",
            cfg.heads
        )));
    }
    let head_dim = channels / cfg.heads;
    for head in 0..cfg.heads {
        add(
            w,
            &format!("{prefix}.h{head}.offset.weight"),
            vec![cfg.points * 2, channels],
        )?;
        add(w, &format!("{prefix}.h{head}.offset.bias"), vec![cfg.points * 2])?;
        add(
            w,
            &format!("{prefix}.h{head}.att.weight"),
            vec![cfg.points, channels],
        )?;
        add(w, &format!("{prefix}.h{head}.att.bias"), vec![cfg.points])?;
        add(
            w,
            &format!("{prefix}.h{head}.value.weight"),
            vec![head_dim, channels],
        )?;
        add(w, &format!("{prefix}.h{head}.value.bias"), vec![head_dim])?;
    }
    add(w, &format!("{prefix}.out.weight"), vec![channels, channels])?;
    add(w, &format!("{prefix}.out.bias"), vec![channels])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = FusionConfig::default();
        let a = BlockWeights::init(&cfg, 7).unwrap();
        let b = BlockWeights::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = BlockWeights::init(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_covers_every_block() {
        let cfg = FusionConfig::default();
        let w = BlockWeights::init(&cfg, 0).unwrap();
        for name in [
            "pillar.mlp.weight",
            "rhs.pos_enc",
            "rhs.enc.conv1.bias",
            "laf.weight_net.kernel",
            "gcf.proj_laf.weight",
            "gcf.pos_r",
            "gcf.mda_c.h0.offset.weight",
            "gcf.mda_r.out.bias",
            "gcf.out.conv.kernel",
            "temporal.conv0.kernel",
            "temporal.norm1.shift",
            "lift.mda.h3.value.weight",
            "head.l1.weight",
        ] {
            assert!(w.contains(name), "missing {name}");
        }
        // Temporal stem consumes all concatenated frames.
        let t = w.get("temporal.conv0.kernel").unwrap();
        assert_eq!(t.dims()[1], cfg.temporal_frames * cfg.channels);
    }

    #[test]
    fn mobw_round_trip_is_byte_exact() {
        let cfg = FusionConfig {
            channels: 4,
            height: 4,
            width: 6,
            depth: 2,
            heads: 2,
            points: 2,
            temporal_frames: 2,
            num_classes: 5,
        };
        let w = BlockWeights::init(&cfg, 3).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.mobw");
        w.write(&path).unwrap();
        let back = BlockWeights::read(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.encode(), w.encode());
    }

    #[test]
    fn get_with_dims_validates_shape() {
        let cfg = FusionConfig::default();
        let w = BlockWeights::init(&cfg, 0).unwrap();
        assert!(w.get_with_dims("pillar.mlp.bias", &[cfg.channels]).is_ok());
        let err = w.get_with_dims("pillar.mlp.bias", &[3]).unwrap_err();
        assert!(err.to_string().contains("pillar.mlp.bias"));
        assert!(w.get("no.such.tensor").is_err());
    }

    #[test]
    fn rejects_non_finite_tensor_values() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rejects_overlong_names() {
        let mut w = BlockWeights::new();
        let long = "x".repeat(33);
        assert!(w.insert(long, Tensor::zeros(vec![1])).is_err());
    }
}
