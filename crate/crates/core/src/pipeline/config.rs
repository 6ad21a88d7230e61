//! Declarative pipeline configuration. Every empirical parameter has a
//! default, so a JSON file only lists what it changes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brain::BrainVolumeParams;
use crate::error::{Error, Result};
use crate::fusion::{StapleOptions, DEFAULT_THRESHOLD, DEFAULT_TOP_N};
use crate::mesh::MeshEnergyParams;
use crate::phantom::PhantomSpec;
use crate::registration::pterm::{I_HIGH_AT_100, I_LOW_AT_100};
use crate::registration::{Lc2Params, NonrigidOptions, PTermParams, RigidOptions};

/// Version of the configuration and report layouts.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    /// Concurrent atlas registrations; 0 uses every available core.
    pub workers: usize,
    pub phantom: PhantomSpec,
    pub brain: BrainVolumeParams,
    pub p_term: PTermConfig,
    pub lc2: Lc2Params,
    pub rigid: RigidOptions,
    pub nonrigid: NonrigidOptions,
    pub fusion: FusionConfig,
    pub mesh: MeshConfig,
    pub stages: StageConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            workers: 0,
            phantom: PhantomSpec::default(),
            brain: BrainVolumeParams::default(),
            p_term: PTermConfig::default(),
            lc2: Lc2Params::default(),
            rigid: RigidOptions::default(),
            nonrigid: NonrigidOptions::default(),
            fusion: FusionConfig::default(),
            mesh: MeshConfig::default(),
            stages: StageConfig::default(),
        }
    }
}

/// P term constants; the intensity thresholds are given at a mean
/// non-zero intensity of 100 and shift with the actual mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PTermConfig {
    pub c1: f64,
    pub c2: f64,
    pub i_low_at_100: f64,
    pub i_high_at_100: f64,
}

impl Default for PTermConfig {
    fn default() -> Self {
        Self {
            c1: 0.02,
            c2: 0.25,
            i_low_at_100: I_LOW_AT_100,
            i_high_at_100: I_HIGH_AT_100,
        }
    }
}

impl PTermConfig {
    pub fn params(&self, i_mean: f64) -> PTermParams {
        PTermParams {
            c1: self.c1,
            c2: self.c2,
            i_low: self.i_low_at_100 + (i_mean - 100.0),
            i_high: self.i_high_at_100 + (i_mean - 100.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub top_n: usize,
    pub threshold: f64,
    /// One 3×3×3 closing of the thresholded label.
    pub closing: bool,
    pub staple: StapleOptions,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            threshold: DEFAULT_THRESHOLD,
            closing: true,
            staple: StapleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub iso: f64,
    /// Fraction of the marching-cubes vertices kept by decimation.
    pub decimate_fraction: f64,
    pub smooth_iterations: usize,
    pub smooth_lambda: f64,
    pub max_iterations: usize,
    /// Energy weights. `l` is replaced by 2·V_k/V_M when the mean atlas
    /// label volume is known.
    pub energy: MeshEnergyParams,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            iso: 0.5,
            decimate_fraction: 0.75,
            smooth_iterations: 1,
            smooth_lambda: 0.5,
            max_iterations: 200,
            energy: MeshEnergyParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Add the P term at the non-rigid stage.
    pub p_term: bool,
    /// Refine the fused label with the deformable mesh.
    pub mesh: bool,
    /// Also produce the comparison variants that need extra work (an
    /// LC²-only registration pass and a mesh refinement of the best atlas).
    pub all_variants: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            p_term: true,
            mesh: true,
            all_variants: false,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Check every section; any failure is reported as a configuration error.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.phantom.validate().map_err(cfg)?;
        self.brain.validate().map_err(cfg)?;
        self.p_term.params(100.0).validate().map_err(cfg)?;
        self.lc2.validate().map_err(cfg)?;
        self.nonrigid.validate().map_err(cfg)?;
        self.mesh.energy.validate().map_err(cfg)?;
        let f = &self.fusion;
        if f.top_n == 0 {
            return Err(Error::Config("fusion.top_n must be at least 1".into()));
        }
        if !(f.threshold > 0.0 && f.threshold < 1.0) {
            return Err(Error::Config("fusion.threshold must lie in (0, 1)".into()));
        }
        let m = &self.mesh;
        if !(m.iso > 0.0 && m.iso < 1.0) {
            return Err(Error::Config("mesh.iso must lie in (0, 1)".into()));
        }
        if !(m.decimate_fraction > 0.0 && m.decimate_fraction <= 1.0) {
            return Err(Error::Config("mesh.decimate_fraction must lie in (0, 1]".into()));
        }
        if !(m.smooth_lambda > 0.0 && m.smooth_lambda < 1.0) {
            return Err(Error::Config("mesh.smooth_lambda must lie in (0, 1)".into()));
        }
        let r = &self.rigid;
        if !(r.bound_deg > 0.0 && r.bound_mm > 0.0 && r.initial_radius > r.final_radius && r.final_radius > 0.0) {
            return Err(Error::Config("rigid bounds and radii must be positive with initial > final".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_the_defaults() {
        let c = Config::from_json("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.brain.cf, 0.95);
        assert_eq!(c.fusion.top_n, 4);
        assert_eq!(c.fusion.threshold, 0.8);
        assert_eq!(c.mesh.energy.beta, 0.82);
        assert_eq!((c.p_term.c1, c.p_term.c2), (0.02, 0.25));
        let p = c.p_term.params(92.0);
        assert_eq!((p.i_low, p.i_high), (77.0, 107.0));
    }

    #[test]
    fn round_trip_and_rejections() {
        let c = Config::default();
        assert_eq!(Config::from_json(&c.to_json().unwrap()).unwrap(), c);
        for bad in [
            r#"{"unknown": 1}"#,
            r#"{"schema_version": 7}"#,
            r#"{"fusion": {"threshold": 1.5}}"#,
            r#"{"brain": {"cf": 0}}"#,
            r#"{"mesh": {"decimate_fraction": 0}}"#,
            "not json",
        ] {
            assert!(matches!(Config::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
