//! Randomization ranges, read from a flat `key = value` text file.
//!
//! ```text
//! # comment
//! image_size = 64, 64
//! workspace_x = 0.30, 0.60
//! clutter_count = 0, 10
//! ```
//!
//! A range is written as `lo, hi`. Unlisted keys keep their defaults and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::{Error, Result};

/// Closed interval `[lo, hi]`.
pub type Span = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    /// `(height, width)` in pixels.
    pub image_size: [usize; 2],
    /// Rectangle on the table (metres) in which the cup is placed.
    pub workspace_x: Span,
    pub workspace_y: Span,
    pub cup_radius: Span,
    pub cup_height: Span,
    /// Radius samples along the cup height.
    pub cup_samples: usize,
    /// Upper bound on max(radius) / min(radius).
    pub cup_max_ratio: f64,
    /// Adjacent radius samples differ by less than `smoothness * (r_max - r_min)`.
    pub cup_smoothness: f64,
    /// Height of the cup's interior floor.
    pub cup_split_height: f64,
    pub clutter_count: [usize; 2],
    /// Edge length range for clutter primitives.
    pub clutter_size: Span,
    /// Minimum horizontal gap between clutter and the cup wall.
    pub clutter_clearance: f64,
    /// Clutter is placed in the workspace grown by this margin.
    pub clutter_spread: f64,
    pub table_center: [f64; 2],
    pub table_size: [f64; 2],
    pub table_scale: Span,
    pub camera_x: Span,
    pub camera_y: Span,
    pub camera_z: Span,
    pub look_at_x: Span,
    pub look_at_y: Span,
    pub look_at_z: Span,
    /// Focal length in pixels.
    pub focal: Span,
    pub light_count: [usize; 2],
    pub light_x: Span,
    pub light_y: Span,
    pub light_z: Span,
    pub light_intensity: Span,
    pub ambient: f64,
    pub wall_color: [f64; 3],
    /// Room box around the table: `[x_min, x_max, y_min, y_max]`.
    pub room: [f64; 4],
    pub wall_height: f64,
    pub floor_z: f64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            workspace_x: [0.30, 0.60],
            workspace_y: [-0.15, 0.15],
            cup_radius: [0.040, 0.060],
            cup_height: [0.07, 0.15],
            cup_samples: 8,
            cup_max_ratio: 1.5,
            cup_smoothness: 0.35,
            cup_split_height: 0.01,
            clutter_count: [0, 10],
            clutter_size: [0.03, 0.10],
            clutter_clearance: 0.01,
            clutter_spread: 0.10,
            table_center: [0.45, 0.0],
            table_size: [0.9, 1.0],
            table_scale: [0.9, 1.2],
            camera_x: [0.43, 0.47],
            camera_y: [-0.52, -0.48],
            camera_z: [0.88, 0.92],
            look_at_x: [0.44, 0.46],
            look_at_y: [-0.01, 0.01],
            look_at_z: [0.02, 0.04],
            focal: [105.0, 111.0],
            light_count: [1, 3],
            light_x: [0.0, 0.9],
            light_y: [-0.8, 0.8],
            light_z: [0.8, 1.5],
            light_intensity: [0.4, 0.9],
            ambient: 0.3,
            wall_color: [0.75, 0.75, 0.72],
            room: [-0.6, 1.5, -1.2, 1.2],
            wall_height: 0.5,
            floor_z: -0.75,
        }
    }
}

impl RandomizationConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Map::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let nums = value
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    v.parse::<f64>()
                        .ok()
                        .and_then(|f| {
                            if f.fract() == 0.0 && !v.contains('.') && !v.contains('e') {
                                Some(Value::Number(Number::from(f as i64)))
                            } else {
                                Number::from_f64(f).map(Value::Number)
                            }
                        })
                        .ok_or_else(|| {
                            Error::Config(format!("line {}: `{v}` is not a number", lineno + 1))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let value = if nums.len() == 1 {
                nums.into_iter().next().expect("one value")
            } else {
                Value::Array(nums)
            };
            map.insert(key.trim().to_string(), value);
        }
        let cfg: Self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("randomization config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serialise back to the flat text form.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        if let Value::Object(map) = value {
            for (k, v) in map {
                let rhs = match v {
                    Value::Array(items) => items
                        .iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(", "),
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {rhs}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let spans: [(&str, Span); 18] = [
            ("workspace_x", self.workspace_x),
            ("workspace_y", self.workspace_y),
            ("cup_radius", self.cup_radius),
            ("cup_height", self.cup_height),
            ("clutter_size", self.clutter_size),
            ("table_scale", self.table_scale),
            ("camera_x", self.camera_x),
            ("camera_y", self.camera_y),
            ("camera_z", self.camera_z),
            ("look_at_x", self.look_at_x),
            ("look_at_y", self.look_at_y),
            ("look_at_z", self.look_at_z),
            ("focal", self.focal),
            ("light_x", self.light_x),
            ("light_y", self.light_y),
            ("light_z", self.light_z),
            ("light_intensity", self.light_intensity),
            ("room_x", [self.room[0], self.room[1]]),
        ];
        for (name, [lo, hi]) in spans {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "{name}: range [{lo}, {hi}] is invalid"
                )));
            }
        }
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.clutter_count[0] > self.clutter_count[1] {
            return err("clutter_count: min exceeds max");
        }
        if self.light_count[0] > self.light_count[1] || self.light_count[1] == 0 {
            return err("light_count: invalid range");
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return err("image_size must be positive");
        }
        if self.cup_radius[0] <= 0.0 || self.cup_height[0] <= self.cup_split_height {
            return err("cup dimensions must be positive and taller than the split height");
        }
        if self.cup_samples < 4 {
            return err("cup_samples must be at least 4");
        }
        if self.cup_max_ratio < 1.0 || self.cup_smoothness <= 0.0 {
            return err("cup_max_ratio must be >= 1 and cup_smoothness > 0");
        }
        if self.clutter_size[0] <= 0.0 || self.table_scale[0] <= 0.0 || self.focal[0] <= 0.0 {
            return err("sizes, scales and focal lengths must be positive");
        }
        if self.room[2] > self.room[3] {
            return err("room: y range is invalid");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ranges_and_scalars() {
        let cfg = RandomizationConfig::parse(
            "# desk\nclutter_count = 0, 0\nfocal = 80, 80 # fixed\ncup_samples = 6\nambient=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.clutter_count, [0, 0]);
        assert_eq!(cfg.focal, [80.0, 80.0]);
        assert_eq!(cfg.cup_samples, 6);
        assert_eq!(cfg.ambient, 0.5);
        assert_eq!(cfg.workspace_x, RandomizationConfig::default().workspace_x);
    }

    #[test]
    fn rejects_inverted_range_and_unknown_key() {
        assert!(matches!(
            RandomizationConfig::parse("workspace_x = 0.6, 0.3"),
            Err(Error::Config(_))
        ));
        assert!(RandomizationConfig::parse("no_such_key = 1").is_err());
        assert!(RandomizationConfig::parse("focal = abc").is_err());
        assert!(RandomizationConfig::parse("clutter_count = 5, 2").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = RandomizationConfig {
            focal: [70.5, 71.25],
            ..Default::default()
        };
        assert_eq!(RandomizationConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
