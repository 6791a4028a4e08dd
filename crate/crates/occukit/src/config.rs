//! Run configuration: grid preset or explicit geometry, class table,
//! pipeline thresholds, fusion shape, and the seed. Loaded from a single
//! JSON document; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::grid::GridSpec;
use crate::io::write_atomic;
use crate::pseudolabel::PseudolabelParams;

/// Class-id table of the surround-view preset; index 0 is free space.
pub const OMNIHD_CLASSES: [&str; 12] = [
    "free",
    "car",
    "pedestrian",
    "rider",
    "large vehicle",
    "cycle",
    "road obstacle",
    "traffic fence",
    "drive. surf.",
    "sidewalk",
    "vegetation",
    "manmade",
];

/// Either a named grid preset or explicit ranges.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum GridConfig {
    Preset {
        preset: String,
    },
    Explicit {
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        voxel_size: f64,
    },
}

impl GridConfig {
    pub fn to_spec(&self) -> Result<GridSpec> {
        match self {
            GridConfig::Preset { preset } => match preset.as_str() {
                "omnihd" => Ok(GridSpec::omnihd()),
                "nuscenes" => Ok(GridSpec::nuscenes()),
                other => Err(Error::invalid(
                    "grid preset",
                    format!("{other:?} is not one of omnihd, nuscenes"),
                )),
            },
            GridConfig::Explicit {
                x_range,
                y_range,
                z_range,
                voxel_size,
            } => GridSpec::new(*x_range, *y_range, *z_range, *voxel_size),
        }
    }

    pub fn explicit(spec: &GridSpec) -> Self {
        GridConfig::Explicit {
            x_range: spec.x_range,
            y_range: spec.y_range,
            z_range: spec.z_range,
            voxel_size: spec.voxel_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    /// Class names by id; index 0 must be the free class.
    pub classes: Vec<String>,
    pub seed: u64,
    pub pseudolabel: PseudolabelParams,
    pub fusion: FusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridConfig::Preset {
                preset: "omnihd".to_string(),
            },
            classes: OMNIHD_CLASSES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            pseudolabel: PseudolabelParams::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn class_count(&self) -> u32 {
        self.classes.len() as u32
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        self.grid.to_spec()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.to_spec()?;
        if self.classes.is_empty() || self.classes.len() > 256 {
            return Err(Error::invalid(
                "config classes",
                format!("{} classes, wanted 1..=256", self.classes.len()),
            ));
        }
        self.fusion.validate()?;
        let p = &self.pseudolabel;
        let positive = [
            ("neighbor_radius", p.neighbor_radius),
            ("noise_height", p.noise_height),
            ("stage2_radius", p.stage2_radius),
            ("ego_half_length", p.ego_half_length),
            ("ego_half_width", p.ego_half_width),
            ("ground_search_radius", p.ground_search_radius),
            ("planarity_max", p.planarity_max),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid("config", format!("{name} must be positive")));
            }
        }
        if p.box_margin < 0.0 {
            return Err(Error::invalid("config", "box_margin must be nonnegative"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: RunConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        write_atomic(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = RunConfig::default();
        config.validate().unwrap();
        config.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.classes, config.classes);
        assert_eq!(back.grid_spec().unwrap().dims(), (240, 160, 16));
    }

    #[test]
    fn presets_resolve() {
        let omnihd = GridConfig::Preset {
            preset: "omnihd".into(),
        };
        assert_eq!(omnihd.to_spec().unwrap().dims(), (240, 160, 16));
        let nusc = GridConfig::Preset {
            preset: "nuscenes".into(),
        };
        assert_eq!(nusc.to_spec().unwrap().dims(), (200, 200, 16));
        let bad = GridConfig::Preset {
            preset: "kitti".into(),
        };
        assert!(bad.to_spec().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"seed": 1, "bogus": true}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn explicit_grid_parses() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"grid": {"x_range": [-6, 6], "y_range": [-4, 4], "z_range": [-1, 1], "voxel_size": 0.5}}"#,
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.grid_spec().unwrap().dims(), (24, 16, 4));
    }

    #[test]
    fn invalid_nested_values_are_rejected() {
        let mut config = RunConfig::default();
        config.pseudolabel.neighbor_radius = 0.0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.fusion.heads = 0;
        assert!(config.validate().is_err());
    }
}
