use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classes::{owned, GENERAL_CLASS_NAMES, TRANS_CLASS_NAMES, TRANS_STUFF, TRANS_THINGS};
use crate::error::{Error, Result};
use crate::train::{GENERAL_SYNTH_NAMES, TRANS_SYNTH_NAMES};

/// Thresholds, tick interval and the class tables the decisions refer to.
/// Every field can be overridden from a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavConfig {
    /// Mean depth (m) below which the frame counts as an obstacle.
    pub obstacle_m: f64,
    /// Area ratio a transparent surface needs before it is announced.
    pub trans_ratio: f64,
    /// Walkable ratio a direction needs before it is suggested.
    pub walkable_ratio: f64,
    /// Seconds between decisions.
    pub interval_s: f64,
    pub general_classes: Vec<String>,
    /// Walkable general classes.
    pub path_classes: Vec<String>,
    pub trans_classes: Vec<String>,
    pub stuff_classes: Vec<String>,
    pub thing_classes: Vec<String>,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            obstacle_m: 1.0,
            trans_ratio: 0.25,
            walkable_ratio: 0.30,
            interval_s: 2.0,
            general_classes: owned(&GENERAL_CLASS_NAMES),
            path_classes: owned(&["floor"]),
            trans_classes: owned(&TRANS_CLASS_NAMES),
            stuff_classes: owned(&TRANS_STUFF),
            thing_classes: owned(&TRANS_THINGS),
        }
    }
}

/// Class ids resolved from the name tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIds {
    pub path: Vec<u8>,
    pub stuff: Vec<u8>,
    pub thing: Vec<u8>,
    /// General classes that can be "the nearest object": all but id 0 and paths.
    pub objects: Vec<u8>,
}

impl NavConfig {
    /// Tables matching the synthetic training scenes.
    pub fn synthetic() -> Self {
        Self {
            general_classes: owned(&GENERAL_SYNTH_NAMES),
            trans_classes: owned(&TRANS_SYNTH_NAMES),
            stuff_classes: owned(&TRANS_SYNTH_NAMES[1..]),
            thing_classes: Vec::new(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.obstacle_m.is_finite() && self.obstacle_m >= 0.0) {
            return Err(Error::Config(format!("obstacle_m {} must be a non-negative distance", self.obstacle_m)));
        }
        for (name, v) in [("trans_ratio", self.trans_ratio), ("walkable_ratio", self.walkable_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if !(self.interval_s.is_finite() && self.interval_s > 0.0) {
            return Err(Error::Config(format!("interval_s {} must be positive", self.interval_s)));
        }
        for table in [&self.general_classes, &self.trans_classes] {
            if table.is_empty() || table.len() > 256 {
                return Err(Error::Config(format!("class table of {} entries", table.len())));
            }
        }
        if let Some(c) = self.stuff_classes.iter().find(|c| self.thing_classes.contains(c)) {
            return Err(Error::Config(format!("{c:?} is both stuff and thing")));
        }
        self.ids()?;
        Ok(())
    }

    pub fn ids(&self) -> Result<ClassIds> {
        let lookup = |table: &[String], names: &[String], what: &str| -> Result<Vec<u8>> {
            names
                .iter()
                .map(|n| {
                    table
                        .iter()
                        .position(|t| t == n)
                        .map(|i| i as u8)
                        .ok_or_else(|| Error::Config(format!("{what} class {n:?} is not in the class table")))
                })
                .collect()
        };
        let path = lookup(&self.general_classes, &self.path_classes, "path")?;
        let objects = (1..self.general_classes.len() as u16)
            .map(|i| i as u8)
            .filter(|i| !path.contains(i))
            .collect();
        Ok(ClassIds {
            stuff: lookup(&self.trans_classes, &self.stuff_classes, "stuff")?,
            thing: lookup(&self.trans_classes, &self.thing_classes, "thing")?,
            path,
            objects,
        })
    }
}
